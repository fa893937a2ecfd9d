//! `acqsynth`: command-line driver for generator training, dataset
//! construction, student training and evaluation.
//!
//! Every command takes a JSON run config. Any config field can be
//! overridden with `--dotted.key value`; values are parsed as JSON and
//! fall back to strings. Outputs go to a directory named by the config
//! digest under `ACQSYNTH_OUT`, `paths.out_dir`, or `./runs`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use acqsynth::config::{digest_json, RunConfig};
use acqsynth::embed::{load_external, EmbeddingVector, TrigramEmbedder, DEFAULT_DIM};
use acqsynth::eval::{coverage, evaluate_accuracy, train_student, Paradigm, TrainedStudent};
use acqsynth::experiment::{
    base_model, generate_config, generator_config, label_config, read_reports, render_summary, run_matrix,
    student_config, tasks, write_reports, write_timings, ReportStatus, TaskScore,
};
use acqsynth::grpo::train_generator;
use acqsynth::pipeline::{generate_dataset, label_samples};
use acqsynth::rewards::{fit_centers, RewardContext};
use acqsynth::sample::{read_jsonl, write_jsonl, Sample};
use acqsynth::selection::{filtered_select, random_select};
use acqsynth::student::{checkpoint, StudentModel, Vocabulary};
use acqsynth::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "acqsynth", version, about = "Acquisition-reward data synthesis on a toy task")]
#[command(after_help = "Config fields can be overridden with --dotted.key value, e.g. --pipeline.n 5.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectMethod {
    Random,
    Filtered,
}

#[derive(Subcommand)]
enum Command {
    /// Warm-start a base model and train the generator with GRPO.
    TrainGenerator(ConfigArg),
    /// Sample a deduplicated dataset from a generator checkpoint.
    Generate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Replace the answers of a dataset with oracle or pseudo labels.
    Label {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        dataset: PathBuf,
        /// Model used for pseudo-labels; defaults to a fresh warm-started base.
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Pick `pipeline.n` samples from a pool.
    Select {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        method: SelectMethod,
        /// Scoring model for filtered selection.
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Train a student from a base checkpoint on a dataset.
    TrainStudent {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        base: PathBuf,
    },
    /// Accuracy of a student against its untrained base on the test splits.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        base: PathBuf,
    },
    /// Mean cosine similarity between two question sets.
    Coverage {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Precomputed `{"id", "vector"}` lines for the generated samples.
        #[arg(long, requires = "reference_embeddings")]
        generated_embeddings: Option<PathBuf>,
        #[arg(long, requires = "generated_embeddings")]
        reference_embeddings: Option<PathBuf>,
        /// Dimension of the precomputed vectors.
        #[arg(long, default_value_t = DEFAULT_DIM)]
        dim: usize,
    },
    /// Run every (config, seed) cell end to end.
    Matrix {
        /// Config files; each holds one config or an array of configs.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Re-render the summary table of a finished matrix.
    Report {
        #[arg(long)]
        reports: PathBuf,
    },
}

fn top_level_keys() -> Vec<String> {
    match serde_json::to_value(RunConfig::new("x", vec![0])) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// Splits `--key value` config overrides from the command's own flags.
/// A flag is an override when it is dotted or names a top-level config
/// field.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), Error> {
    let top = top_level_keys();
    let mut kept = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            kept.push(arg);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let root = key.split('.').next().unwrap_or("");
        if !key.contains('.') && !top.iter().any(|t| t == root) {
            kept.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| Error::config(key.clone(), "override needs a value"))?,
        };
        overrides.push((key, value));
    }
    Ok((kept, overrides))
}

fn prepare_dir(cfg: &RunConfig) -> Result<PathBuf, Error> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(dir)
}

fn write_json(path: &Path, value: &Value) -> Result<(), Error> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Refuses to overwrite an input file.
fn output_path(dir: &Path, name: &str, inputs: &[&Path]) -> Result<PathBuf, Error> {
    let out = dir.join(name);
    for input in inputs {
        if let (Ok(a), Ok(b)) = (fs::canonicalize(input), fs::canonicalize(&out)) {
            if a == b {
                return Err(Error::contract(format!("output {} would overwrite an input", out.display())));
            }
        }
    }
    Ok(out)
}

fn load_model(path: &Path) -> Result<StudentModel, Error> {
    checkpoint::load(path, Arc::new(Vocabulary::default()))
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn train_generator_cmd(cfg: RunConfig) -> Result<Value, Error> {
    let seed = cfg.seeds[0];
    let dir = prepare_dir(&cfg)?;
    let base = base_model(&cfg, seed)?;
    let base_path = dir.join("base.ckpt");
    checkpoint::save(&base, &base_path)?;
    let (toy, _) = tasks(&cfg)?;
    let mut log = BufWriter::new(File::create(dir.join("generator_log.jsonl"))?);
    let out = train_generator(&base, &base, &toy.train, &generator_config(&cfg, seed), cfg.template, Some(&mut log))?;
    log.flush()?;
    let gen_path = dir.join("generator.ckpt");
    checkpoint::save(&out.model, &gen_path)?;
    let curve = &out.reward_curve;
    let tail = &curve[curve.len().saturating_sub(10)..];
    let final_reward = (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64);
    Ok(json!({
        "command": "train-generator",
        "steps": curve.len(),
        "final_reward": final_reward,
        "base": base_path,
        "generator": gen_path,
    }))
}

fn generate_cmd(cfg: RunConfig, ckpt: &Path) -> Result<Value, Error> {
    let seed = cfg.seeds[0];
    let generator = load_model(ckpt)?;
    let (toy, _) = tasks(&cfg)?;
    let dir = prepare_dir(&cfg)?;
    let (samples, manifest) = generate_dataset(&generator, &toy.train, cfg.pipeline.n, &generate_config(&cfg, seed))?;
    let out = output_path(&dir, "dataset.jsonl", &[ckpt])?;
    write_jsonl(&out, &samples)?;
    write_json(&sidecar(&out), &serde_json::to_value(&manifest)?)?;
    Ok(json!({
        "command": "generate",
        "produced": manifest.produced,
        "discard_rate": manifest.discard_rate,
        "incomplete": manifest.incomplete,
        "dataset": out,
    }))
}

fn label_cmd(cfg: RunConfig, dataset: &Path, student: Option<&Path>) -> Result<Value, Error> {
    let seed = cfg.seeds[0];
    let samples = read_jsonl(dataset)?;
    let model = match student {
        Some(p) => load_model(p)?,
        None => base_model(&cfg, seed)?,
    };
    let dir = prepare_dir(&cfg)?;
    let input = samples.len();
    let lcfg = label_config(&cfg, seed);
    let (labeled, unlabeled, degenerate, agreement) = label_samples(&model, samples, &lcfg)?;
    let out = output_path(&dir, "labeled.jsonl", &[dataset])?;
    write_jsonl(&out, &labeled)?;
    let summary = json!({
        "labeler": lcfg.labeler,
        "input": input,
        "labeled": labeled.len(),
        "unlabeled": unlabeled,
        "degenerate_labels": degenerate,
        "agreement_rate": agreement,
    });
    write_json(&sidecar(&out), &summary)?;
    let mut line = json!({"command": "label", "dataset": out});
    line.as_object_mut().expect("object").extend(summary.as_object().cloned().unwrap_or_default());
    Ok(line)
}

fn select_cmd(cfg: RunConfig, dataset: &Path, method: SelectMethod, student: Option<&Path>) -> Result<Value, Error> {
    let seed = cfg.seeds[0];
    let pool = read_jsonl(dataset)?;
    let k = cfg.pipeline.n;
    if k > pool.len() {
        return Err(Error::config("pipeline.n", format!("cannot select {k} of {} samples", pool.len())));
    }
    let dir = prepare_dir(&cfg)?;
    let select_seed = acqsynth::config::StageSeeds::new(seed).select;
    let out = output_path(&dir, "selected.jsonl", &[dataset])?;
    let chosen: Vec<Sample> = match method {
        SelectMethod::Random => random_select(&pool, k, select_seed)?,
        SelectMethod::Filtered => {
            let model = match student {
                Some(p) => load_model(p)?,
                None => base_model(&cfg, seed)?,
            };
            let (toy, _) = tasks(&cfg)?;
            let limit = cfg.generator.seed_limit.min(toy.train.len());
            let embedder = TrigramEmbedder::default();
            let centers = fit_centers(&toy.train[..limit], &embedder, cfg.generator.reward.min_cluster_size)?;
            let ctx = RewardContext {
                student: &model,
                centers: &centers,
                embedder,
                sampling: cfg.generator.response_generation,
            };
            let (chosen, scored) =
                filtered_select(&pool, k, &ctx, &cfg.generator.reward, cfg.pipeline.normalization, select_seed)?;
            scored.write_ledger(BufWriter::new(File::create(output_path(&dir, "scores.jsonl", &[dataset])?)?))?;
            chosen
        }
    };
    write_jsonl(&out, &chosen)?;
    Ok(json!({"command": "select", "selected": chosen.len(), "pool": pool.len(), "dataset": out}))
}

fn train_student_cmd(cfg: RunConfig, dataset: &Path, base: &Path) -> Result<Value, Error> {
    let seed = cfg.seeds[0];
    let data = read_jsonl(dataset)?;
    let base_model = load_model(base)?;
    let dir = prepare_dir(&cfg)?;
    let student = train_student(&base_model, &data, &student_config(&cfg, seed))?;
    let out = output_path(&dir, "student.ckpt", &[dataset, base])?;
    checkpoint::save(&student.model, &out)?;
    write_json(
        &sidecar(&out),
        &json!({
            "paradigm": cfg.eval.paradigm,
            "prefix": student.prefix,
            "max_new_symbols": student.max_new_symbols,
            "trained_on": data.len(),
        }),
    )?;
    Ok(json!({"command": "train-student", "paradigm": cfg.eval.paradigm, "samples": data.len(), "student": out}))
}

fn load_student(path: &Path, default_max: usize) -> Result<(TrainedStudent, Paradigm), Error> {
    let model = load_model(path)?;
    let meta_path = sidecar(path);
    let meta: Value = if meta_path.is_file() {
        serde_json::from_str(&fs::read_to_string(&meta_path)?)?
    } else {
        json!({})
    };
    let prefix = meta["prefix"].as_str().unwrap_or("").to_string();
    let max_new_symbols = meta["max_new_symbols"].as_u64().map(|m| m as usize).unwrap_or(default_max);
    let paradigm = serde_json::from_value(meta["paradigm"].clone()).unwrap_or(Paradigm::Sft);
    Ok((
        TrainedStudent {
            model,
            prefix,
            max_new_symbols,
        },
        paradigm,
    ))
}

fn eval_cmd(cfg: RunConfig, student: &Path, base: &Path) -> Result<Value, Error> {
    let (student, paradigm) = load_student(student, cfg.eval.max_new_symbols)?;
    let base = TrainedStudent::plain(load_model(base)?, cfg.eval.max_new_symbols);
    let (toy, ood) = tasks(&cfg)?;
    let dir = prepare_dir(&cfg)?;
    let test = TaskScore::new(evaluate_accuracy(&student, &toy.test)?, evaluate_accuracy(&base, &toy.test)?);
    let ood = TaskScore::new(evaluate_accuracy(&student, &ood.test)?, evaluate_accuracy(&base, &ood.test)?);
    let report = json!({"paradigm": paradigm, "test": test, "ood": ood, "config_digest": cfg.digest()});
    write_json(&dir.join("eval.json"), &report)?;
    Ok(json!({"command": "eval", "paradigm": paradigm, "accuracy": test.accuracy, "delta": test.delta, "ood_accuracy": ood.accuracy}))
}

fn vectors(samples: &[Sample], external: Option<&Path>, dim: usize) -> Result<Vec<EmbeddingVector>, Error> {
    match external {
        None => {
            let e = TrigramEmbedder::default();
            Ok(samples.iter().map(|s| e.embed(&s.question)).collect())
        }
        Some(path) => {
            let ext = load_external(path, dim)?;
            samples
                .iter()
                .map(|s| {
                    ext.vectors
                        .get(&s.id)
                        .cloned()
                        .ok_or_else(|| Error::contract(format!("{}: no vector for sample {:?}", path.display(), s.id)))
                })
                .collect()
        }
    }
}

fn coverage_cmd(
    generated: &Path,
    reference: &Path,
    gen_emb: Option<&Path>,
    ref_emb: Option<&Path>,
    dim: usize,
) -> Result<Value, Error> {
    let g = read_jsonl(generated)?;
    let r = read_jsonl(reference)?;
    let c = coverage(&vectors(&g, gen_emb, dim)?, &vectors(&r, ref_emb, dim)?)?;
    Ok(json!({"command": "coverage", "coverage": c, "generated": g.len(), "reference": r.len()}))
}

fn load_configs(paths: &[PathBuf], overrides: &[(String, String)]) -> Result<Vec<RunConfig>, Error> {
    let mut out = Vec::new();
    for path in paths {
        let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let doc: Value = serde_json::from_str(&text).map_err(|e| Error::config("<root>", e.to_string()))?;
        match doc {
            Value::Array(items) => {
                for item in items {
                    out.push(RunConfig::from_document(item, overrides)?);
                }
            }
            other => out.push(RunConfig::from_document(other, overrides)?),
        }
    }
    Ok(out)
}

fn matrix_cmd(configs: &[PathBuf], jobs: usize, overrides: &[(String, String)]) -> Result<Value, Error> {
    let configs = load_configs(configs, overrides)?;
    let root = configs.first().map(|c| c.out_root()).unwrap_or_else(|| PathBuf::from("runs"));
    let digests: Vec<String> = configs.iter().map(|c| c.digest()).collect();
    let dir = root.join(format!("matrix-{}", &digest_json(&digests)[..16]));
    fs::create_dir_all(dir.join("cells"))?;
    fs::write(dir.join("configs.json"), serde_json::to_string_pretty(&configs)? + "\n")?;
    let reports = run_matrix(&configs, jobs, Some(&dir.join("cells")))?;
    write_reports(dir.join("reports.jsonl"), &reports)?;
    write_timings(dir.join("timings.jsonl"), &reports)?;
    let summary = render_summary(&reports);
    fs::write(dir.join("summary.txt"), &summary)?;
    let failed = reports.iter().filter(|r| r.status == ReportStatus::Failed).count();
    let line = json!({"command": "matrix", "reports": reports.len(), "failed": failed, "dir": dir});
    if failed > 0 {
        println!("{line}");
        return Err(Error::contract(format!("{failed} of {} cells failed; see {}", reports.len(), dir.display())));
    }
    Ok(line)
}

fn report_cmd(path: &Path) -> Result<Value, Error> {
    let reports = read_reports(path)?;
    print!("{}", render_summary(&reports));
    Ok(json!({"command": "report", "reports": reports.len()}))
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<Value, Error> {
    let load = |c: &ConfigArg| RunConfig::load(&c.config, overrides);
    let no_overrides = |cmd: &str| {
        if overrides.is_empty() {
            Ok(())
        } else {
            Err(Error::config(overrides[0].0.clone(), format!("`{cmd}` takes no config")))
        }
    };
    match cli.command {
        Command::TrainGenerator(c) => train_generator_cmd(load(&c)?),
        Command::Generate { cfg, checkpoint } => generate_cmd(load(&cfg)?, &checkpoint),
        Command::Label { cfg, dataset, student } => label_cmd(load(&cfg)?, &dataset, student.as_deref()),
        Command::Select {
            cfg,
            dataset,
            method,
            student,
        } => select_cmd(load(&cfg)?, &dataset, method, student.as_deref()),
        Command::TrainStudent { cfg, dataset, base } => train_student_cmd(load(&cfg)?, &dataset, &base),
        Command::Eval { cfg, student, base } => eval_cmd(load(&cfg)?, &student, &base),
        Command::Coverage {
            generated,
            reference,
            generated_embeddings,
            reference_embeddings,
            dim,
        } => {
            no_overrides("coverage")?;
            coverage_cmd(&generated, &reference, generated_embeddings.as_deref(), reference_embeddings.as_deref(), dim)
        }
        Command::Matrix { configs, jobs } => matrix_cmd(&configs, jobs, overrides),
        Command::Report { reports } => {
            no_overrides("report")?;
            report_cmd(&reports)
        }
    }
}

fn fail(err: &Error) -> ExitCode {
    let (code, line) = match err {
        Error::Config { key, message } => (2, json!({"error": "config", "key": key, "message": message})),
        other => (1, json!({"error": "stage", "message": other.to_string()})),
    };
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => return fail(&e),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                eprintln!("{}", json!({"error": "usage", "message": e.to_string().trim()}));
                return ExitCode::from(2);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli, &overrides) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
