//! Base-model warm start, dataset generation, and pseudo-labeling.
//!
//! The shared base model is warm-started on a corpus that has the toy
//! task's question shape and the tagged layout, but scrambled reasoning
//! results and answers. It therefore emits parseable triplets some of the
//! time while knowing nothing about the arithmetic itself.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{hdbscan, summarize_clusters, HdbscanParams};
use crate::embed::TrigramEmbedder;
use crate::error::{Error, Result};
use crate::grpo::rotating_prompt;
use crate::prompt::{render_student_pair_text, TemplateKind};
use crate::rewards::{answer_span, sample_responses};
use crate::rng::derive_seed;
use crate::sample::{parse_tagged, render_tagged, Sample, Source};
use crate::student::{GenerationConfig, ModelShape, Optimizer, OptimizerKind, StudentModel, Symbol, Vocabulary, EOS};
use crate::task::{make_sample, oracle_answer, parse_expression, Expr, Op, ToyTaskConfig};

/// Warm-start settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub corpus_size: usize,
    /// Seed examples shown in the generator prompts of the warm start.
    pub icl_examples: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 600,
            batch_size: 16,
            learning_rate: 0.003,
            optimizer: OptimizerKind::Adam,
            corpus_size: 1000,
            icl_examples: 2,
            seed: 0,
        }
    }
}

/// Task-shaped triplets whose intermediate results and answers are drawn
/// near, but almost never at, the true values.
pub fn warmup_corpus(task: &ToyTaskConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let ops: Vec<Op> = task.operators.chars().filter_map(Op::from_symbol).collect();
    if ops.is_empty() || task.max_operand < task.min_operand || task.min_operators == 0 {
        return Err(Error::config("task", "invalid toy task settings"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let k = rng.gen_range(task.min_operators..=task.max_operators.max(task.min_operators));
        let expr = Expr {
            operands: (0..=k).map(|_| rng.gen_range(task.min_operand..=task.max_operand)).collect(),
            ops: (0..k).map(|_| *ops.choose(&mut rng).unwrap()).collect(),
        };
        let id = format!("warm-{:05}", out.len());
        let Some(mut s) = make_sample(&expr, id, task.choices, &mut rng) else {
            continue;
        };
        let steps = expr.steps().unwrap_or_default();
        let fake: Vec<i64> = steps.iter().map(|&(_, _, _, r)| r + rng.gen_range(-9..=9)).collect();
        s.reasoning = steps
            .iter()
            .zip(&fake)
            .map(|((a, op, b, _), f)| format!("{a}{}{b}={f}", op.symbol()))
            .collect::<Vec<_>>()
            .join("; ");
        if task.choices {
            s.answer = ["A", "B", "C", "D"][rng.gen_range(0..4)].to_string();
            s.reasoning = format!("{}; choice {}", s.reasoning, s.answer);
        } else {
            s.answer = fake.last().copied().unwrap_or(expr.operands[0]).to_string();
        }
        out.push(s);
    }
    Ok(out)
}

fn encode_with_eos(model: &StudentModel, text: &str) -> Result<Vec<Symbol>> {
    let mut v = model.encode(text)?;
    v.push(EOS);
    Ok(v)
}

/// Randomly initialized model warm-started on [`warmup_corpus`] for both
/// roles: generator prompt to full triplet, and student prompt to
/// reasoning and answer.
pub fn pretrain_base(
    vocab: Arc<Vocabulary>,
    shape: ModelShape,
    init_seed: u64,
    task: &ToyTaskConfig,
    kind: TemplateKind,
    cfg: &PretrainConfig,
) -> Result<StudentModel> {
    let mut model = StudentModel::new(vocab, shape, init_seed);
    if cfg.steps == 0 {
        return Ok(model);
    }
    if cfg.batch_size == 0 || cfg.corpus_size == 0 {
        return Err(Error::config("pretrain.batch_size", "batch size and corpus size must be positive"));
    }
    let corpus = warmup_corpus(task, cfg.corpus_size, derive_seed(cfg.seed, &[0]))?;
    let mut pairs = Vec::with_capacity(2 * corpus.len());
    for (i, s) in corpus.iter().enumerate() {
        let prompt = rotating_prompt(kind, &corpus, cfg.icl_examples, i + 1);
        pairs.push((model.encode(&prompt)?, encode_with_eos(&model, &render_tagged(s))?));
        let (p, t) = render_student_pair_text(s);
        pairs.push((model.encode(&p)?, encode_with_eos(&model, &t)?));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1]));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;
    for step in 0..cfg.steps {
        let batch: Vec<(Vec<Symbol>, Vec<Symbol>)> = (0..cfg.batch_size)
            .map(|_| pairs[rng.gen_range(0..pairs.len())].clone())
            .collect();
        model = opt.update(&model, &batch)?;
        if step % 50 == 0 {
            log::debug!("warm start step {step}");
        }
    }
    Ok(model)
}

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub generation: GenerationConfig,
    /// Attempt cap as a multiple of the requested count.
    pub attempt_factor: usize,
    pub icl_examples: usize,
    pub template: TemplateKind,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            generation: GenerationConfig::default(),
            attempt_factor: 20,
            icl_examples: 4,
            template: TemplateKind::Math,
            seed: 0,
        }
    }
}

/// Accounting for one generation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub requested: usize,
    pub produced: usize,
    pub attempts: usize,
    pub discarded_format: usize,
    pub discarded_duplicate: usize,
    pub discard_rate: f64,
    /// The attempt cap was reached before `requested` samples were accepted.
    pub incomplete: bool,
}

impl GenerationManifest {
    fn new(requested: usize) -> Self {
        GenerationManifest {
            requested,
            produced: 0,
            attempts: 0,
            discarded_format: 0,
            discarded_duplicate: 0,
            discard_rate: 0.0,
            incomplete: false,
        }
    }

    fn finish(mut self) -> Self {
        self.discard_rate = if self.attempts == 0 {
            0.0
        } else {
            (self.discarded_format + self.discarded_duplicate) as f64 / self.attempts as f64
        };
        self
    }
}

/// Source of raw generator output, one text per attempt index.
pub trait TextSource: Sync {
    fn attempt(&self, index: usize) -> Result<String>;
}

/// Samples from a generator model prompted with rotating seed windows.
pub struct ModelSource<'a> {
    pub model: &'a StudentModel,
    pub seeds: &'a [Sample],
    pub cfg: &'a GenerateConfig,
}

impl TextSource for ModelSource<'_> {
    fn attempt(&self, index: usize) -> Result<String> {
        let prompt = rotating_prompt(self.cfg.template, self.seeds, self.cfg.icl_examples, index);
        let prompt = self.model.encode(&prompt)?;
        let gen = self.cfg.generation.with_seed(derive_seed(self.cfg.seed, &[index as u64]));
        Ok(self.model.decode(&self.model.sample(&prompt, &gen)?.symbols))
    }
}

const ATTEMPT_BATCH: usize = 16;

/// Draws attempts in order, keeping parseable texts with unseen
/// questions, until `n` are accepted or `attempt_factor * n` attempts are
/// spent.
pub fn generate_from(source: &dyn TextSource, n: usize, attempt_factor: usize) -> Result<(Vec<Sample>, GenerationManifest)> {
    let (kept, manifest, _) = generate_accepted(source, n, attempt_factor, &|_| true)?;
    Ok((kept, manifest))
}

/// [`generate_from`] with an extra acceptance test on parsed, unseen
/// samples. Rejected samples are counted separately and do not enter the
/// manifest's discard counts.
pub fn generate_accepted(
    source: &dyn TextSource,
    n: usize,
    attempt_factor: usize,
    accept: &dyn Fn(&Sample) -> bool,
) -> Result<(Vec<Sample>, GenerationManifest, usize)> {
    let mut manifest = GenerationManifest::new(n);
    let mut kept = Vec::with_capacity(n);
    let mut seen = HashSet::new();
    let mut rejected = 0;
    let cap = attempt_factor.saturating_mul(n);
    while kept.len() < n && manifest.attempts < cap {
        let start = manifest.attempts;
        let end = (start + ATTEMPT_BATCH).min(cap);
        let texts: Vec<String> = (start..end)
            .into_par_iter()
            .map(|i| source.attempt(i))
            .collect::<Result<_>>()?;
        for text in texts {
            if kept.len() == n {
                break;
            }
            manifest.attempts += 1;
            match parse_tagged(&text) {
                Err(_) => manifest.discarded_format += 1,
                Ok(t) => {
                    if !seen.insert(t.question.trim().to_string()) {
                        manifest.discarded_duplicate += 1;
                        continue;
                    }
                    let sample = t.into_sample(format!("gen-{:05}", kept.len()), Source::Generated);
                    if accept(&sample) {
                        kept.push(sample);
                    } else {
                        rejected += 1;
                    }
                }
            }
        }
    }
    manifest.produced = kept.len();
    manifest.incomplete = kept.len() < n;
    if manifest.incomplete {
        log::warn!("attempt cap reached: {} of {n} samples accepted", kept.len());
    }
    Ok((kept, manifest.finish(), rejected))
}

/// [`generate_from`] over a generator model.
pub fn generate_dataset(
    generator: &StudentModel,
    seeds: &[Sample],
    n: usize,
    cfg: &GenerateConfig,
) -> Result<(Vec<Sample>, GenerationManifest)> {
    let source = ModelSource {
        model: generator,
        seeds,
        cfg,
    };
    generate_from(&source, n, cfg.attempt_factor)
}

/// A pseudo-label and how it was chosen.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub answer: String,
    /// Every response was noise; the first response's answer was used.
    pub degenerate: bool,
}

/// Medoid answer of the largest answer cluster. Ties between clusters go
/// to the one holding the lowest-index answer.
pub fn label_from_answers(answers: &[String], min_cluster_size: usize) -> Result<PseudoLabel> {
    if answers.is_empty() {
        return Err(Error::contract("pseudo-labeling needs at least one answer"));
    }
    let embedder = TrigramEmbedder::default();
    let points: Vec<_> = answers.iter().map(|a| embedder.embed_answer(a)).collect();
    let assignment = hdbscan(&points, HdbscanParams::with_min_cluster_size(min_cluster_size))?;
    let summaries = summarize_clusters(&points, &assignment)?;
    let best = summaries.iter().min_by_key(|s| {
        let first = assignment.labels.iter().position(|&l| l == s.cluster_id).unwrap_or(usize::MAX);
        (std::cmp::Reverse(s.size), first)
    });
    Ok(match best {
        Some(s) => PseudoLabel {
            answer: answers[s.medoid_index].clone(),
            degenerate: false,
        },
        None => PseudoLabel {
            answer: answers[0].clone(),
            degenerate: true,
        },
    })
}

/// Pseudo-label for `question` from `n` sampled student responses.
pub fn pseudo_label(
    student: &StudentModel,
    question: &str,
    n: usize,
    seed: u64,
    sampling: &GenerationConfig,
    min_cluster_size: usize,
) -> Result<PseudoLabel> {
    if n < 2 {
        return Err(Error::contract("pseudo-labeling needs N >= 2"));
    }
    let responses = sample_responses(student, question, n, seed, sampling)?;
    let answers: Vec<String> = responses.iter().map(|r| answer_span(r)).collect();
    label_from_answers(&answers, min_cluster_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labeler {
    /// Pseudo-labels from the student's own sampled answers.
    #[default]
    #[serde(rename = "self")]
    SelfLabel,
    /// Exact evaluation of the toy question.
    Oracle,
}

/// Labeling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub labeler: Labeler,
    /// Responses sampled per question.
    pub n: usize,
    pub min_cluster_size: usize,
    pub sampling: GenerationConfig,
    pub seed: u64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            labeler: Labeler::SelfLabel,
            n: 8,
            min_cluster_size: 2,
            sampling: GenerationConfig {
                max_new_symbols: 64,
                ..GenerationConfig::default()
            },
            seed: 0,
        }
    }
}

/// A labeled dataset with its statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub manifest: GenerationManifest,
    pub labeler: Labeler,
    /// Samples dropped because the oracle could not answer them.
    pub unlabeled: usize,
    /// Pseudo-labels with no answer cluster.
    pub degenerate_labels: usize,
    /// Fraction of oracle-answerable questions whose pseudo-label matches
    /// the oracle; `None` when no question is answerable.
    pub agreement_rate: Option<f64>,
}

/// Overwrites generated answers with labels. Oracle mode drops questions
/// that are not well-formed toy questions. Reasoning is kept.
pub fn label_samples(student: &StudentModel, samples: Vec<Sample>, cfg: &LabelConfig) -> Result<(Vec<Sample>, usize, usize, Option<f64>)> {
    let labels: Vec<Option<PseudoLabel>> = match cfg.labeler {
        Labeler::Oracle => samples.iter().map(|_| None).collect(),
        Labeler::SelfLabel => samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                pseudo_label(
                    student,
                    &s.question,
                    cfg.n,
                    derive_seed(cfg.seed, &[i as u64]),
                    &cfg.sampling,
                    cfg.min_cluster_size,
                )
                .map(Some)
            })
            .collect::<Result<_>>()?,
    };
    let mut out = Vec::with_capacity(samples.len());
    let (mut unlabeled, mut degenerate, mut answerable, mut agree) = (0, 0, 0, 0);
    for (mut s, label) in samples.into_iter().zip(labels) {
        let truth = oracle_answer(&s.question);
        match (cfg.labeler, label) {
            (Labeler::Oracle, _) => match truth {
                Some(a) => {
                    s.answer = a;
                    answerable += 1;
                    agree += 1;
                }
                None => {
                    unlabeled += 1;
                    continue;
                }
            },
            (Labeler::SelfLabel, Some(l)) => {
                degenerate += l.degenerate as usize;
                if let Some(t) = &truth {
                    answerable += 1;
                    agree += (*t == l.answer) as usize;
                }
                s.answer = l.answer;
            }
            (Labeler::SelfLabel, None) => unreachable!("self labels are computed for every sample"),
        }
        s.source = Source::Generated;
        s.rewards = None;
        out.push(s);
    }
    for (i, s) in out.iter_mut().enumerate() {
        s.id = format!("gen-{i:05}");
    }
    let rate = (answerable > 0).then(|| agree as f64 / answerable as f64);
    Ok((out, unlabeled, degenerate, rate))
}

/// Generates questions with `generator` and labels them. With the oracle
/// labeler, questions it cannot answer are skipped during generation so
/// that `n` labeled samples are produced when the attempt cap allows.
pub fn build_labeled_dataset(
    generator: &StudentModel,
    student: &StudentModel,
    seeds: &[Sample],
    n: usize,
    gen_cfg: &GenerateConfig,
    label_cfg: &LabelConfig,
) -> Result<LabeledDataset> {
    let source = ModelSource {
        model: generator,
        seeds,
        cfg: gen_cfg,
    };
    let answerable = |s: &Sample| label_cfg.labeler != Labeler::Oracle || oracle_answer(&s.question).is_some();
    let (samples, manifest, skipped) = generate_accepted(&source, n, gen_cfg.attempt_factor, &answerable)?;
    let (samples, dropped, degenerate_labels, agreement_rate) = label_samples(student, samples, label_cfg)?;
    let unlabeled = skipped + dropped;
    Ok(LabeledDataset {
        samples,
        manifest,
        labeler: label_cfg.labeler,
        unlabeled,
        degenerate_labels,
        agreement_rate,
    })
}

/// True if `question` is a well-formed toy question.
pub fn is_task_question(question: &str) -> bool {
    let body = question.trim().trim_start_matches("What is").split('?').next().unwrap_or("");
    parse_expression(body).is_some()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(&'static str);
    impl TextSource for Fixed {
        fn attempt(&self, _: usize) -> Result<String> {
            Ok(self.0.to_string())
        }
    }

    /// Cycles through a list of texts.
    struct Cycle(Vec<String>);
    impl TextSource for Cycle {
        fn attempt(&self, i: usize) -> Result<String> {
            Ok(self.0[i % self.0.len()].clone())
        }
    }

    #[test]
    fn zero_requested() {
        let (s, m) = generate_from(&Fixed("x"), 0, 20).unwrap();
        assert!(s.is_empty());
        assert_eq!((m.attempts, m.discarded_format, m.discarded_duplicate, m.discard_rate), (0, 0, 0, 0.0));
        assert!(!m.incomplete);
    }

    #[test]
    fn fixed_sample_generator() {
        let text = "<question>What is 1+1?</question>\n<reasoning>1+1=2</reasoning>\n<answer>2</answer>";
        let (s, m) = generate_from(&Fixed(text), 3, 20).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(m.attempts, 60);
        assert_eq!(m.discarded_duplicate, 59);
        assert!(m.incomplete);
        assert!((m.discard_rate - 59.0 / 60.0).abs() < 1e-15);
    }

    #[test]
    fn manifest_arithmetic_by_hand() {
        let good = |q: &str| format!("<question>{q}</question><reasoning>r</reasoning><answer>a</answer>");
        // attempts: ok, bad, dup, ok, bad, ok -> 3 kept after 6 attempts.
        let texts = vec![good("q1"), "junk".into(), good("q1"), good("q2"), "<question>".into(), good("q3")];
        let (s, m) = generate_from(&Cycle(texts), 3, 20).unwrap();
        assert_eq!(s.iter().map(|x| x.question.as_str()).collect::<Vec<_>>(), ["q1", "q2", "q3"]);
        assert_eq!((m.attempts, m.discarded_format, m.discarded_duplicate), (6, 2, 1));
        assert_eq!(m.discard_rate, 0.5);
        assert_eq!(m.produced, 3);
    }

    #[test]
    fn pseudo_label_cases() {
        let same = vec!["7".to_string(); 8];
        assert_eq!(label_from_answers(&same, 2).unwrap(), PseudoLabel { answer: "7".into(), degenerate: false });
        let mut mixed: Vec<String> = vec!["13".into(); 3];
        mixed.extend(vec!["12".to_string(); 5]);
        assert_eq!(label_from_answers(&mixed, 2).unwrap().answer, "12");
        // Eight answers with pairwise orthogonal embeddings.
        let e = TrigramEmbedder::default();
        let mut distinct: Vec<String> = Vec::new();
        for c in 'a'..='z' {
            let cand = c.to_string().repeat(3);
            let orthogonal = distinct
                .iter()
                .all(|d| crate::embed::cosine_similarity(&e.embed_answer(d), &e.embed_answer(&cand)).unwrap() == 0.0);
            if orthogonal && distinct.len() < 8 {
                distinct.push(cand);
            }
        }
        assert_eq!(distinct.len(), 8);
        let l = label_from_answers(&distinct, 2).unwrap();
        assert_eq!(l, PseudoLabel { answer: distinct[0].clone(), degenerate: true });
        let tie: Vec<String> = ["xxxx", "yyyy", "yyyy", "xxxx"].iter().map(|s| s.to_string()).collect();
        assert_eq!(label_from_answers(&tie, 2).unwrap().answer, "xxxx");
    }

    #[test]
    fn warmup_corpus_is_task_shaped_but_mislabeled() {
        let task = ToyTaskConfig::default();
        let corpus = warmup_corpus(&task, 200, 4).unwrap();
        assert_eq!(corpus.len(), 200);
        let right = corpus.iter().filter(|s| oracle_answer(&s.question).as_deref() == Some(s.answer.as_str())).count();
        assert!(corpus.iter().all(|s| is_task_question(&s.question)));
        assert!(right < 40, "{right} correct labels");
    }

    #[test]
    fn oracle_labels_are_exact() {
        let student = StudentModel::new(Arc::new(Vocabulary::default()), ModelShape::default(), 1);
        let samples = vec![
            Sample::new("a", "What is 2*3+1?", "x", "0", Source::Generated),
            Sample::new("b", "Tell me a story", "x", "0", Source::Generated),
            Sample::new("c", "What is 10-4?", "x", "0", Source::Generated),
        ];
        let cfg = LabelConfig {
            labeler: Labeler::Oracle,
            ..Default::default()
        };
        let (out, unlabeled, _, rate) = label_samples(&student, samples, &cfg).unwrap();
        assert_eq!(out.iter().map(|s| s.answer.as_str()).collect::<Vec<_>>(), ["7", "6"]);
        assert_eq!(unlabeled, 1);
        assert_eq!(rate, Some(1.0));
        assert!(out.iter().all(|s| s.reasoning == "x"));
    }

    #[test]
    fn greedy_self_label_matches_greedy_answer() {
        let student = StudentModel::new(Arc::new(Vocabulary::default()), ModelShape::default(), 2);
        let cfg = LabelConfig {
            sampling: GenerationConfig {
                max_new_symbols: 30,
                ..Default::default()
            }
            .greedy(),
            ..Default::default()
        };
        let q = "What is 3+3?";
        let prompt = student.encode(&crate::prompt::student_prompt(q)).unwrap();
        let greedy = student.decode(&student.sample(&prompt, &cfg.sampling).unwrap().symbols);
        let samples = vec![Sample::new("a", q, "r", "?", Source::Generated)];
        let (out, _, _, _) = label_samples(&student, samples, &cfg).unwrap();
        assert_eq!(out[0].answer, answer_span(&greedy));
        let a = pseudo_label(&student, q, 8, 5, &LabelConfig::default().sampling, 2).unwrap();
        let b = pseudo_label(&student, q, 8, 5, &LabelConfig::default().sampling, 2).unwrap();
        assert_eq!(a, b);
    }
}
